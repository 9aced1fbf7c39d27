from setuptools import setup

setup(
    name='lightmove',
    version='0.1.0',
    description='Neural-ODE next-location prediction for vehicle and check-in trajectories',
    packages=['lightmove'],
    python_requires='>=3.8',
    install_requires=['numpy<2.0', 'scipy', 'tqdm'],
    entry_points={'console_scripts': ['lightmove=lightmove.cli:main']},
)
